"""Two-stream visual speech recognition engine.

Frame encoders with appended delta features feed per-stream bidirectional
LSTMs whose outputs are fused by another BLSTM and classified per frame;
utterances are labeled by majority vote. Everything (layers, gradients,
RBM pretraining, the training loop) is implemented on plain numpy arrays.
"""

__version__ = "0.1.0"
