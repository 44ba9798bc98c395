"""mergeflow: traffic-bottleneck microsimulation with masked-attention RL
controllers for decentralized cooperative driving."""

__version__ = "0.1.0"
