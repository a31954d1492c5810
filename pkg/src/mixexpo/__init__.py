"""Mixed-exposure image enhancement toolkit.

Subpackages and modules:
    imaging  - pixel-level primitives (I/O, luminance, blur, gamma, color)
    masks    - histogram thresholding and exposure label maps
    model    - the enhancement network (attention maps, local/global blocks, fusion)
    losses   - differentiable training objectives
    data     - dataset scanning, synthetic degradation, batching
    train    - two-phase optimization loop
    metrics  - PSNR/SSIM evaluation and benchmarking
    cli      - command-line entry point
"""

__version__ = "0.1.0"
