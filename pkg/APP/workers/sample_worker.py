import logging
import queue
import threading

import torch

from APP.helpers.errors import HyperInvertError

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger("SampleWorker")


class BatchPrefetcher:
    """
    Producer thread that slices shuffled mini-batches out of an image tensor and
    feeds them through a bounded queue.

    A single producer with its own seeded generator keeps the batch order
    identical from run to run. Use as a context manager so the thread is
    stopped on exit.
    """

    def __init__(self, images, batch_size, seed=0, max_prefetch=4, device=None):
        if len(images) == 0:
            raise HyperInvertError("Cannot draw batches from an empty dataset")
        self.images = images
        self.batch_size = min(batch_size, len(images))
        self.device = device
        self.rng = torch.Generator().manual_seed(seed)
        self.batches = queue.Queue(maxsize=max_prefetch)
        self.abort = threading.Event()
        self.error = None
        self.thread = threading.Thread(target=self._produce, daemon=True)

    def _produce(self):
        try:
            while not self.abort.is_set():
                order = torch.randperm(len(self.images), generator=self.rng)
                for start in range(0, len(order) - self.batch_size + 1, self.batch_size):
                    batch = self.images[order[start:start + self.batch_size]]
                    while not self.abort.is_set():
                        try:
                            self.batches.put(batch, timeout=0.1)
                            break
                        except queue.Full:
                            continue
                    if self.abort.is_set():
                        return
        except Exception as e:
            logger.error(f"Batch producer failed: {e}")
            self.error = e
            self.batches.put(None)

    def start(self):
        self.thread.start()
        return self

    def next(self):
        batch = self.batches.get()
        if batch is None:
            raise HyperInvertError(f"Batch producer stopped: {self.error}")
        return batch.to(self.device) if self.device is not None else batch

    def stop(self):
        self.abort.set()
        self.thread.join(timeout=5)

    def __enter__(self):
        return self.start()

    def __exit__(self, exc_type, exc, tb):
        self.stop()
        return False
