"""Difference decomposition networks for infrared small-target segmentation,
built on a small numpy reverse-mode autodiff engine.

Submodules: ``tensor`` (autodiff core), ``bdm`` (basis decomposition),
``spatial`` and ``temporal`` (difference bases), ``networks``, ``training``,
``metrics``, ``synth`` (synthetic scenes), ``io`` (file formats), ``cli``.
Nothing is imported eagerly so that ``DDN_THREADS`` can take effect before
numpy loads.
"""

__version__ = "0.1.0"
