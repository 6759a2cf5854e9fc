"""Visual imitation of cloth folding on a hinged board: graphs, motion saliency, shape features, policies, simulator."""

__version__ = "0.1.0"
