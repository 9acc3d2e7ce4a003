"""advspeech: adversarial speech generation, datasets and detection"""

__version__ = "0.1.0"
