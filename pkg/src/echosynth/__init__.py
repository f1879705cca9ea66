"""ECG-conditioned echocardiography video generation, desk scale.

The package is layered bottom-up:

- ``autodiff``, ``optim``, ``container``: numerics and serialization.
- ``layers``: transformer building blocks shared by every model.
- ``tokenizer``: factorized spatiotemporal video tokenizer with VQ or
  lookup-free quantization.
- ``losses``: reconstruction / perceptual / commitment / adversarial terms
  and the patch discriminator.
- ``ecg``: ECG signal handling and the trainable patch embedder.
- ``generator``: masked visual token modeling transformer plus token critic.
- ``sampler``: progressive iterative decoding with classifier-free guidance
  and clip extrapolation.
- ``synthdata``: procedural paired ECG/video corpus with analytic ejection
  fraction.
- ``evalkit``: reconstruction metrics and EF agreement reports.
- ``config``, ``pipeline``, ``cli``: run configuration and the command-line
  entry points.
"""

__version__ = "0.1.0"
