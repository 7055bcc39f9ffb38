"""tensorpot: interatomic potential on rank-2 Cartesian tensor features.

Subpackages:
    tensors   - 3x3 tensor algebra (decomposition, norms, products)
    autodiff  - reverse-mode tape over dense arrays, with second-order support
    data      - extended-XYZ IO, neighbor lists, synthetic label oracle, splits
    model     - the tensor message-passing potential with attribute scaling
    training  - loss, Adam, schedules, train/eval loops, checkpoints
    cli       - command-line experiment driver
"""

__version__ = "0.1.0"
