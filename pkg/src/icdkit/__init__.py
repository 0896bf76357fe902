"""icdkit: corpus handling, stratified splitting, corrected multi-label
evaluation, boundary tuning, a desk-scale model zoo, and error analyses
for clinical code prediction experiments."""

__version__ = "0.1.0"
