"""matchlab: online bipartite matching environments, policies, oracles, and evaluation."""

__version__ = "0.1.0"
