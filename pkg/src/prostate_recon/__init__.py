"""3D reconstruction of prostatectomy specimens from annotated histology slides."""

__version__ = "0.1.0"
