"""peftkit: parameter-efficient fine-tuning on a self-contained tensor stack.

Subpackages:
    tensor      dense tensors + reverse-mode autodiff
    nn          ViT / residual CNN backbones and the classifier head
    quantize    NF4 blockwise quantization with double-quantized scales
    peft        LoRA and DoRA adapters, merging, parameter accounting
    train       AdamW, warmup+cosine schedule, early stopping, checkpoints
    data        loaders, augmentation pipeline, synthetic dataset generator
    metrics     classification reports, confusion matrices, efficiency
    experiments config-driven experiment runner
    cli         command-line interface (`peftkit ...`)
"""

__version__ = "0.1.0"

from .tensor import GradTape, Tensor, backward  # noqa: F401
