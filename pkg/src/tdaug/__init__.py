"""Task-driven learned data augmentation for medical image segmentation."""
