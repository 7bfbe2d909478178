"""Cross-modal local/global alignment head: losses, gradients, training and evaluation."""

from .align import Batch, prepare_batch
from .dataio import Corpus, Study, read_corpus, write_corpus
from .grad import HeadParams, backward, fd_check, init_params
from .loss import total_loss
from .synth import SynthConfig, generate
from .train import Checkpoint, TrainConfig, fit

__version__ = "0.1.0"
