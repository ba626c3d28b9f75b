"""SPT-augmented left-ventricle index regression and robustness evaluation."""
__version__ = "0.1.0"
