"""daftlab: desk-scale lab for distillation of adversarially fine-tuned teachers."""

__version__ = "0.1.0"
