"""Head- and token-level attribution of image-to-text flow in toy multimodal transformers."""
__version__ = "0.1.0"
