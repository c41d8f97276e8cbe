"""Implicit (fixed-point) state-space sequence models at desk scale.

The package bundles the exact word-problem oracle (``algebra``), a
counter-based sampler for mixed-hardness token distributions (``dataset``),
a small numpy reverse-mode tape (``autodiff``) with sequential/parallel
linear-recurrence scans (``scan``), the weight-tied SSM and attention
backbones (``model``), a damped fixed-point solver (``solver``), phantom and
unrolled gradient training (``training``), verification instruments
(``analysis``), and a CLI (``cli``).
"""

__version__ = "0.1.0"
