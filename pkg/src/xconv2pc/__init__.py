"""Two-party secure CNN inference with multiplication-lean operators.

Subsystems:

* :mod:`xconv2pc.ring` -- exact l-bit fixed-point tensors.
* :mod:`xconv2pc.graph` -- network IR, shape inference, operator cells.
* :mod:`xconv2pc.winograd` -- transform bases, tiling math, rewrite pass.
* :mod:`xconv2pc.plan` / :mod:`xconv2pc.clear` -- fixed-point execution
  plans and the clear-text reference interpreters.
* :mod:`xconv2pc.zoo` -- backbone x operator-variant model generator.
* :mod:`xconv2pc.costs` -- multiplication counting and byte estimation.
* :mod:`xconv2pc.runtime` -- the two-party protocol engine.
* :mod:`xconv2pc.cli` -- operator-facing command line.
"""

__version__ = "0.1.0"
