"""Two-party secure federated transfer learning.

A label-rich source party and a label-poor target party jointly train
transfer models over vertically partitioned data without exposing raw
features or labels, exchanging only encrypted loss/gradient components and
masked gradients under Paillier homomorphic encryption.
"""

__version__ = "0.1.0"
