"""Training-free content injection between toy diffusion models."""

from .conditioner import Vocabulary, bundle, encode_prompt, scale_condition
from .denoiser import DenoiserModel, ModelConfig, forward_batched3, load, predict_noise, save
from .injection import (InjectionConfig, InjectionMask, Trajectory, ditail, inj_forward_attn,
                        inj_forward_res, load_trajectory, save_trajectory, should_inject)
from .pipelines import (generate, invert, novel_generation, style_transfer, stylized_edit,
                        transfer_matrix)
from .schedule import Schedule, ddim_invert_step, ddim_step, make_schedule

__version__ = "0.1.0"
