"""csiforge: variable-rate CSI feedback codec and MIMO-OFDM simulation harness."""

__version__ = "0.1.0"
