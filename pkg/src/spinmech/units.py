"""Unit factors. Everything inside the package is SI (Pa, Hz, T, m, kg, s)."""

GPa = 1e9
MPa = 1e6
kHz = 1e3
MHz = 1e6
GHz = 1e9
mT = 1e-3
um = 1e-6
nm = 1e-9
pN = 1e-12
nN = 1e-9
uN = 1e-6

# 1 mT/um expressed in T/m
mT_per_um = 1e3

zg = 1e-24  # zeptogram in kg
amu = 1.66053906660e-27
carbon_mass = 12.0 * amu

# Susceptibilities are conventionally quoted in MHz/GPa.
MHz_per_GPa = MHz / GPa
