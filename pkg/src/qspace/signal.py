"""Kurtosis signal model and the b-value/diffusivity unit convention."""

import numpy as np

# b in s/mm^2 times ADC in um^2/ms gives 1e-3 of a dimensionless exponent
BD_SCALE = 1e-3


def bd_product(b, adc):
    """Dimensionless diffusion exponent ``b * ADC`` under the package units."""
    return np.multiply(b, adc) * BD_SCALE


def forward_signal(s0, adc, akc, b):
    """Evaluate ``S0 * exp(-b ADC + b^2 ADC^2 AKC / 6)``.

    All arguments broadcast against each other. ``b`` is in s/mm^2 and ``adc`` in
    um^2/ms.
    """
    x = bd_product(b, adc)
    return np.asarray(s0) * np.exp(-x + x * x * np.asarray(akc) / 6.0)
