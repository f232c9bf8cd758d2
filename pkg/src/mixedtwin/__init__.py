"""Mixed digital-twin testbed.

Emulated physical vehicles, virtual vehicles, and roadside facilities are
unified in a single mixed-space coordinate frame by a cloud-style hub that
fuses state streams, validates and dispatches commands, and lets a human
operator inject live interventions while experiments are recorded.
"""

__version__ = "0.1.0"
