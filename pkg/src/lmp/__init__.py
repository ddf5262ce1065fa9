"""Zero-shot motion transfer for joint-attention (MM-DiT style) video denoisers.

A desk-scale toy denoiser with reference motion injection, attention-based
foreground selection and appearance suppression, all checkable against
brute-force oracles.
"""
from .latent import LatentVideo, PromptTokens, TokenLayout, detokenize, tokenize
from .mmdit import AttentionMap, BlockTrace, BlockWeights, HiddenStates, ModelWeights
from .pipeline import RunSpec, centroid_trajectory, lmp_generate, trajectory_similarity
from .scheduler import ScheduleConfig

__all__ = [
    "AttentionMap", "BlockTrace", "BlockWeights", "HiddenStates", "LatentVideo", "ModelWeights",
    "PromptTokens", "RunSpec", "ScheduleConfig", "TokenLayout", "centroid_trajectory", "detokenize",
    "lmp_generate", "tokenize", "trajectory_similarity",
]
