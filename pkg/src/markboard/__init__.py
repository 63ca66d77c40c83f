"""Multi-bit black-box watermarking with hot-swappable LoRA branches.

One training run yields a clean and a watermarked model that share base,
``A`` and router; every distributed copy mixes their branches according to
a per-user signature, which black-box probing later recovers.
"""

__version__ = "0.1.0"
