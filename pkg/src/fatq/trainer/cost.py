"""Compute-cost bookkeeping: bit operations and transform overhead."""
import math


def bop(m_w, m_a, mac_count):
    """Bit operations: weight bits x activation bits x multiply-accumulates."""
    if min(m_w, m_a, mac_count) <= 0:
        raise ValueError("bitwidths and MAC count must be positive")
    return m_w * m_a * mac_count


def conv_macs(c_out, c_in, k, h, w):
    return h * w * c_out * c_in * k * k


def transform_overhead(c_out, c_in, k, h, w):
    """Extra MACs of the weight transform relative to the convolution itself.

    With ``N = C_in * k^2``: two length-N FFTs per filter
    (``2 * C_out * N * log2 N``), magnitude and mask products
    (``4 * C_out * N``) and the generator mix (``C_out^2 * N``).
    Returns ``(delta_mac, base_mac, ratio)``.
    """
    if min(c_out, c_in, k, h, w) <= 0:
        raise ValueError("all dimensions must be positive")
    n = c_in * k * k
    delta = 2 * c_out * n * math.log2(n) + 4 * c_out * n + c_out * c_out * n
    base = conv_macs(c_out, c_in, k, h, w)
    return delta, base, delta / base
