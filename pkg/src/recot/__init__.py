"""recot: recurrent cross-view object localization on a synthetic benchmark."""

__version__ = "0.1.0"
