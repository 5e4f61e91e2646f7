"""Distributionally robust building energy management toolkit.

Subpackages:
    quantiles    inverse-CDF machinery (chi-square, Student t, normal)
    dist_model   AR(1) forecast-error fitting, ambiguity sets, uncertainty boxes
    plant        energy-hub devices, RC buildings, district assembly
    compile      robust LP compilation of the horizon problem (CEP/OLP/ADR)
    lp           LP solve/verify and text-format export/import
    sim          receding-horizon closed-loop evaluation and tuning
    cli          command-line entry point
"""

__version__ = "0.1.0"
