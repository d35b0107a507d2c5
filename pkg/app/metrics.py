# metrics.py
from prometheus_client import CollectorRegistry, Counter, write_to_textfile

REGISTRY = CollectorRegistry()

TRAIN_ITERATIONS_TOTAL = Counter(
    "vlm_train_iterations_total",
    "SGD iterations run while training layer models",
    ["layer"],
    registry=REGISTRY,
)

RECONSTRUCT_ITERATIONS_TOTAL = Counter(
    "vlm_reconstruct_iterations_total",
    "Gradient descent iterations run by image reconstruction",
    registry=REGISTRY,
)

IMAGES_PROCESSED_TOTAL = Counter(
    "vlm_images_processed_total",
    "Images handled by per-image commands",
    ["command", "status"],
    registry=REGISTRY,
)

GRADIENT_CHECKS_TOTAL = Counter(
    "vlm_gradient_checks_total",
    "Gradient comparisons against the finite-difference oracle",
    ["result"],
    registry=REGISTRY,
)


def dump(path: str) -> None:
    write_to_textfile(path, REGISTRY)
