"""Latent dynamics identification and open-loop control for a pneumatic
two-segment planar arm observed through low-resolution images."""

from .validation import (ContractError, DivergenceError, FormatError,
                         SingularityError)
from .models import (ExcitationNet, KoopmanModel, LatentState, MlpDynModel,
                     OscillatorModel, RolloutTape, linearized_update_matrix,
                     rollout, rollout_vjp, step_koopman, step_mlp,
                     step_oscillator)

__version__ = "0.1.0"
