"""DNN/accelerator co-design toolkit.

Subpackages cover the model intermediate representation, weight/activation
quantizers, a small reverse-mode autodiff engine, a quantization-aware
trainer, analytical latency/resource estimation, pipeline startup and cache
planning, and two design-space search engines (stochastic coordinate descent
and a differentiable supernet search).
"""

__version__ = "0.1.0"
