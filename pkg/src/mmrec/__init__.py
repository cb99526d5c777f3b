"""Multimodal personalisation: unified token sequences, gated item-exclusive
cross-attention, a focal multi-task objective and constrained decoding, all on
a small numpy autodiff engine."""

__version__ = "0.1.0"
