from hallulrp.model.decoding import DecodeResult, beam_decode, greedy_decode, greedy_decode_batch, sequence_logprob
from hallulrp.model.io import WeightFileError, load_weights, save_weights
from hallulrp.model.training import TrainConfig, TrainingDivergedError, TrainResult, train_toy
from hallulrp.model.transformer import (
    ModelConfig,
    TransformerWeights,
    encode,
    forward_trace,
    init_weights,
    loss_and_grad,
)
from hallulrp.model.vocab import BOS, EOS, PAD, UNK, Vocabulary, detokenize, tokenize

__all__ = [
    "BOS", "EOS", "PAD", "UNK",
    "DecodeResult", "ModelConfig", "TrainConfig", "TrainResult", "TrainingDivergedError",
    "TransformerWeights", "Vocabulary", "WeightFileError",
    "beam_decode", "detokenize", "encode", "forward_trace", "greedy_decode", "greedy_decode_batch",
    "init_weights", "load_weights", "loss_and_grad", "save_weights", "sequence_logprob",
    "tokenize", "train_toy",
]
