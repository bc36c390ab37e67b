"""slukit: a desk-scale joint ASR+NLU training testbed.

Transducer and attention-based ASR over a small reverse-mode autodiff engine,
five ASR-to-NLU interfaces, a transformer NLU, MLE / multi-task / n-best
sequence losses, SLU metrics, a synthetic corpus generator, and a training
CLI.
"""

from .autodiff import Tape, Tensor, backward, grad_check, grad_check_params, no_grad
from .config import RunConfig
from .data import CorpusSpec, Tokenizer, generate_corpus
from .decoding import Hypothesis, NBest
from .interfaces import AsrExposure, InterfaceOutput, build_interface_output, expose_asr
from .las import LasModel, las_beam_decode, las_forward
from .metrics import MetricReport, SluAnnotation, evaluate_corpus
from .nlu import TnluConfig, TnluModel, nlu_predict, tnlu_forward
from .rnnt import RnntModel, rnnt_beam_decode, rnnt_forward, rnnt_loss

__version__ = "0.1.0"
