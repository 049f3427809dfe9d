"""Context-aware convolutional re-ranking at desk scale.

A self-contained relevance scorer (similarity-matrix convolution, cascade
k-max pooling, context disambiguation, shuffled combination) with its own
reverse-mode differentiation engine, a pairwise training harness, TREC
qrels/run handling, and ERR / pair-accuracy evaluation.
"""

__version__ = "0.1.0"
