"""herbid: herb image classification toolkit.

Dataset curation and splitting, seeded augmentation, a small CNN inference
runtime with frozen-backbone feature extraction, softmax-head training,
multiclass evaluation, a compact binary model package, and a local HTTP
inference service.
"""

__version__ = "0.1.0"
