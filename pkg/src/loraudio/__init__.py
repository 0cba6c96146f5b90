"""Low-rank adapters for continual fake-audio detection, on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .corpus import Corpus, CorpusSpec, Waveform, load_corpus, save_corpus, split_corpus, synth_corpus
from .lfcc import LfccConfig, lfcc
from .lora import AdapterSet, LoraPair, init_adapters, load_adapters, merge, save_adapters
from .metrics import ScoreRecord, compute_eer
from .senet import ModelParams, SENetConfig, build_model, forward, load_checkpoint, save_checkpoint
from .trainer import SequencePlan, TrainConfig, evaluate, finetune, run_sequence, train_adapter, train_base
