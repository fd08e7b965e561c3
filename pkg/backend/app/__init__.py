# This file makes 'app/' a Python package, enabling relative imports like from .dit import DiffusionTransformer
