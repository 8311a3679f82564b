import numpy as np

from localgrad.network import LayerSpec


def mlp_specs(width: int, depth: int) -> list[LayerSpec]:
    """depth parametric linear layers of uniform width, each followed by relu."""
    specs = []
    for _ in range(depth):
        specs.append(LayerSpec("linear", (width,)))
        specs.append(LayerSpec("relu"))
    return specs


def conv_specs() -> list[LayerSpec]:
    """Small conv stack: 4 parametric layers on (1, 8, 8) inputs."""
    return [
        LayerSpec("conv2d", (4, 3), padding="same"), LayerSpec("relu"),
        LayerSpec("conv2d", (4, 3), padding="same"), LayerSpec("relu"),
        LayerSpec("conv2d", (8, 3), padding="same"), LayerSpec("relu"),
        LayerSpec("avgpool_global"),
        LayerSpec("linear", (16,)), LayerSpec("relu"),
    ]


def random_batch(rng: np.random.Generator, n: int, input_shape, classes: int):
    x = rng.standard_normal((n, *input_shape))
    y = rng.integers(0, classes, size=n)
    return x, y
