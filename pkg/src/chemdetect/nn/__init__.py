"""Neural detectors written directly in numpy: layers, losses, backward
passes and the five architecture builders."""

from .functional import (LstmParams, conv1d_forward, dense_forward, kl_divergence, loss_sequence, loss_symbol,
                         lstm_step, maxpool1d, relu, same_padding, sigmoid, softmax)
from .layers import LSTM, BiLSTM, Conv1D, Dense, Flatten, Layer, MaxPool1D, ReLU, Softmax, TimeDistributed
from .network import (ARCHITECTURES, DEFAULT_BINS, RECURRENT, Network, UnknownArchitecture, backward, batch_loss,
                      bilstm_sequence_forward, build_architecture, lstm_sequence_forward)

__all__ = [
    "LstmParams", "conv1d_forward", "dense_forward", "kl_divergence", "loss_sequence", "loss_symbol", "lstm_step",
    "maxpool1d", "relu", "same_padding", "sigmoid", "softmax",
    "LSTM", "BiLSTM", "Conv1D", "Dense", "Flatten", "Layer", "MaxPool1D", "ReLU", "Softmax", "TimeDistributed",
    "ARCHITECTURES", "DEFAULT_BINS", "RECURRENT", "Network", "UnknownArchitecture", "backward", "batch_loss",
    "bilstm_sequence_forward", "build_architecture", "lstm_sequence_forward",
]
