"""Few-shot topic-adaptive story generation at desk scale.

GRU encoder-decoder with visual attention and prototype conditioning,
trained by second-order episodic meta-learning, evaluated with n-gram
diversity metrics and a topic-classifier adaptation indicator.
"""

__version__ = "0.1.0"
