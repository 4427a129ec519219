"""Core numerical pipeline: front-end, relevance weighting, training."""
