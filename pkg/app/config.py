# app/config.py
import os

# Scalar precision for runtime scans ("float32" or "float64")
PRECISION = os.getenv("VLM_PRECISION", "float32")

LOG_LEVEL = os.getenv("VLM_LOG_LEVEL", "INFO").upper()

# Global seed; every consumer derives its own named stream from it
SEED = int(os.getenv("VLM_SEED", "0"))

# Worker cap for per-image commands
JOBS = int(os.getenv("VLM_JOBS", str(os.cpu_count() or 1)))

# Progress line cadence (iterations or images)
LOG_EVERY = int(os.getenv("VLM_LOG_EVERY", "25"))

# Training
CLIP_NORM = float(os.getenv("VLM_CLIP_NORM", "5.0"))

# Saliency
SIGMA_REL = float(os.getenv("VLM_SIGMA_REL", "0.030"))
NEGATIVE_CAP = int(os.getenv("VLM_NEGATIVE_CAP", "5000"))

# Reconstruction divergence guard
DIVERGENCE_LIMIT = float(os.getenv("VLM_DIVERGENCE_LIMIT", "1e12"))

# Output schema version for manifest.json
MANIFEST_SCHEMA_VERSION = 1
