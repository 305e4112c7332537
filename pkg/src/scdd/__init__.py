"""Self-correcting discrete diffusion on categorical token spaces.

Forward corruption mixes an absorbing [mask] channel with uniform token
resampling, controlled by two independent survival probabilities. The
backward process derived from Bayes' rule can rewrite already-unmasked
tokens directly, so generation never needs a remasking step.
"""

from .backward import (BackwardStep, backward_rate, model_backward,
                       true_posterior)
from .checkpoint import Checkpoint, CheckpointError
from .config import ConfigError, RunConfig, parse_config
from .denoiser import (Denoiser, DenoiserParams, OptimizerState, TrainConfig,
                       loss_and_grad, optimizer_step, train)
from .forward import (ChannelTag, Vocab, forward_rate, kernel, marginal,
                      sample_forward)
from .objective import (LossBreakdown, diffusion_term_continuous,
                        diffusion_term_discrete, sequence_nelbo,
                        validation_perplexity)
from .oracle import (GiddParams, MarkovSource, brute_posterior,
                     exact_oracle_ppl, exact_single_token_nll,
                     favored_next_source, finite_diff_grad, generate_corpus,
                     gidd_equivalence_check, mdlm_equivalence_check,
                     rank_by_elbo, uniform_source)
from .sampler import (SampleTrace, correction_rate, correction_rate_per_step,
                      cumulative_correction_curve, nucleus_filter, sample,
                      sample_batch)
from .schedule import (NoiseSchedule, SchedulePoint, TimeGrid, discretize,
                       eval_schedule)

__version__ = "0.1.0"
