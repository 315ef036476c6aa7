"""Desk-scale toolkit for training memory-based agents in a gridworld.

Modules: ``trajstore`` (chunked episode store), ``sampler`` (episode-continuous
batches), ``env`` (gridworld + callback hooks), ``policy`` (recurrent policy),
``pretrain`` (behavior cloning), ``finetune`` (KL-regularized PPO),
``pipeline`` (threaded rollouts), ``bench`` (tasks and evaluation) and ``cli``.
"""

__version__ = "0.1.0"
