"""Desk-scale geometry distillation into a miniature vision-language model."""
