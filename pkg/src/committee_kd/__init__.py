"""Committee knowledge distillation for rating-prediction MLPs.

A small numpy autodiff core (:mod:`committee_kd.tensor`), tap-aware MLP models
(:mod:`committee_kd.models`), the question/answer augmenter machinery
(:mod:`committee_kd.augmenters`), synthetic rating data
(:mod:`committee_kd.data`), training loops and baselines
(:mod:`committee_kd.training`), and an experiment CLI
(:mod:`committee_kd.cli`).
"""

from .tensor import Parameter, Tape, Tensor, backward, no_tape

__all__ = ["Tensor", "Parameter", "Tape", "backward", "no_tape"]
__version__ = "0.1.0"
