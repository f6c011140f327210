"""NLOS-aware BLE positioning: path-loss fitting, GP classification of line
of sight, a precomputed LOS grid and particle-filter tracking."""

__version__ = "0.1.0"
