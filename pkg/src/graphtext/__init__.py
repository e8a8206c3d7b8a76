"""Joint contrastive pretraining of graph node and text encoders.

Two encoders (a graph attention network over nodes, a small transformer
over texts) are aligned in a shared embedding space with a batch-wise
contrastive loss whose targets can mix the true node-text correspondence
with a graph-derived similarity distribution.
"""

__version__ = "0.1.0"
