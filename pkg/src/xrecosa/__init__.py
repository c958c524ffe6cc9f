"""X-ReCoSa: hierarchical GRU + self-attention dialogue generation with a split fusion decoder."""

from .corpus import Batch, Dialogue, Sample, Vocab, build_vocab, expand_samples, load_dialogues, make_batches, tokenize
from .decoding import DecodeConfig, beam_decode, greedy_decode
from .metrics import MetricReport, bleu_k, corpus_bleu, distinct_k, rouge
from .model import EncodedContext, ModelConfig, ParamSet, XReCoSa, forward_logits, init_params, nll_loss
from .tensor import Tensor, backward, grad_check, no_grad, precision
from .trainer import AdamW, TrainConfig, Trainer, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
