"""focalseg: focal-attention U-shaped segmentation in numpy.

Subpackages and modules:

* ``focalseg.tensor``: dense tensors with reverse-mode gradients
* ``focalseg.attention``: focal self-attention
* ``focalseg.model``: the FocalUNETR network and presets
* ``focalseg.labels``, ``focalseg.losses``, ``focalseg.metrics``
* ``focalseg.data``: phantom synthesis, datasets and batching
* ``focalseg.train``, ``focalseg.bench``, ``focalseg.gradsuite``, ``focalseg.cli``
"""

__version__ = "0.1.0"
