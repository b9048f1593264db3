"""Complex-valued vision models with continuous rotation equivariance.

Subpackages:
    ctensor   -- dense complex tensor engine with reverse-mode gradients
    stem      -- steerable harmonic convolution stack
    encoder   -- equivariant transformer encoder
    head      -- invariant classification head
    model     -- configuration, assembly, checkpointing
    data      -- dataset parsing, rotation, preprocessing
    harness   -- equivariance verification and benchmark reports
    training  -- optimizer, schedulers, training loop
    cli       -- command-line entry points
"""

__version__ = "0.1.0"
