"""Spin-mechanical sensing with NV centers in diamond nanostructures.

Modules:

- ``spin``: NV spin Hamiltonian, stress-to-coupling map and ODMR spectra
- ``beam``: Euler-Bernoulli pillars, cantilevers and clamped-clamped modes
- ``calibration``: uniaxial-stress susceptibility fits and force inversion
- ``force``: force sensitivity and pillar-array force imaging
- ``inertial``: mass sensing and mass imaging with a nanobeam
- ``cli``: scenario-driven command-line workbench
"""

__version__ = "0.1.0"
