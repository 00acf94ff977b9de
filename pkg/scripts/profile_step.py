import argparse
import logging
import resource
import sys
import time
from pathlib import Path

import numpy as np

# Add project root to sys.path
sys.path.insert(0, str(Path(__file__).parent.parent))

from nearquery.config import LossWeights, ModelConfig, PhantomSpec
from nearquery.lossmatch import SegTargets, total_loss
from nearquery.model.segmodel import SegModel
from nearquery.numcore.tensor import Tensor, no_grad
from nearquery.phantom import gen_phantom_sample, model_input

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(levelname)s - %(message)s',
    stream=sys.stdout
)
logger = logging.getLogger(__name__)


def get_memory_usage():
    """Peak resident memory in MB (ru_maxrss is in KB on Linux)"""
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024


def profile(image_size: int, d_model: int, n_queries: int, repeats: int):
    logger.info("--- Profiling one training sample ---")
    cfg = ModelConfig(d_model=d_model, n_queries=n_queries)
    spec = PhantomSpec(image_size=image_size, n=1)
    sample = gen_phantom_sample(spec, 0)
    image = Tensor(model_input(sample.image))
    targets = SegTargets.from_label_map(sample.label, cfg.n_classes)

    initial_mem = get_memory_usage()
    model = SegModel(cfg)
    logger.info(f"Model: {model.num_parameters()} parameters, input {image.shape}")
    logger.info(f"Memory after build: {get_memory_usage():.2f} MB (start {initial_mem:.2f} MB)")

    forward_times, backward_times = [], []
    for _ in range(repeats):
        model.zero_grad()
        start = time.perf_counter()
        loss, breakdown = total_loss(model(image), targets, LossWeights())
        mid = time.perf_counter()
        loss.backward()
        end = time.perf_counter()
        forward_times.append(mid - start)
        backward_times.append(end - mid)
    logger.info(f"Loss {float(loss.data):.4f} {breakdown}")
    logger.info(f"Forward:  {np.median(forward_times):.3f} s (median of {repeats})")
    logger.info(f"Backward: {np.median(backward_times):.3f} s (median of {repeats})")

    start = time.perf_counter()
    with no_grad():
        model(image)
    logger.info(f"Inference (no graph): {time.perf_counter() - start:.3f} s")
    logger.info(f"Peak memory: {get_memory_usage():.2f} MB")
    logger.info("--- Profiling completed ---")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Time and memory of one forward/backward pass")
    parser.add_argument("--image-size", type=int, default=128)
    parser.add_argument("--d-model", type=int, default=64)
    parser.add_argument("--queries", type=int, default=20)
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()
    profile(args.image_size, args.d_model, args.queries, args.repeats)
