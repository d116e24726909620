"""
Checkpoint locations: run-directory layout, the local download cache and
remote checkpoint archives.

A checkpoint argument is either a local directory or an http(s) URL to a
.zip of such a directory. Archives are streamed into the cache with
requests, written to a ``.download`` file first and moved into place only
when complete.
"""
import hashlib
import logging
import os
import shutil
import threading
import time
import zipfile

import requests

from APP.helpers.errors import HyperInvertError

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger("CheckpointManager")

BASE_DIR = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
CACHE_ENV = "HYPERINVERT_CACHE"

# Sub-directories of a training run
RUN_LAYOUT = {
    "generator": "generator",
    "encoder": "encoder",
    "hypernet": "hypernet",
    "config": "experiment.json",
    "train_log": "train_log.jsonl",
    "heldout": "heldout_metrics.json",
}

# URLs being fetched right now and the lock that guards each of them
current_downloads = {}
download_lock = threading.Lock()


def get_cache_dir():
    """Return the download cache directory, creating it if missing."""
    cache_dir = os.environ.get(CACHE_ENV) or os.path.join(BASE_DIR, ".checkpoints")
    os.makedirs(cache_dir, exist_ok=True)
    return cache_dir


def run_paths(run_dir):
    """
    Paths of every artefact inside a training run directory

    Args:
        run_dir (str): Run (output) directory

    Returns:
        dict: Artefact key -> absolute path
    """
    return {key: os.path.join(run_dir, name) for key, name in RUN_LAYOUT.items()}


def is_remote(location):
    return str(location).lower().startswith(("http://", "https://"))


def _cache_key(url):
    return hashlib.sha1(url.encode("utf-8")).hexdigest()[:16]


def download_archive(url, target_path, callback=None):
    """
    Stream a remote file to target_path

    Args:
        url (str): http(s) URL
        target_path (str): Final file location
        callback (function, optional): Called as callback(url, percent)

    Returns:
        str: target_path
    """
    temp_path = target_path + ".download"
    logger.info(f"Downloading checkpoint from {url}...")
    try:
        with requests.get(url, stream=True, timeout=30) as r:
            r.raise_for_status()
            total_size = int(r.headers.get('content-length', 0))
            downloaded = 0
            last_emit_time = 0.0
            last_progress = 0.0

            with open(temp_path, 'wb') as f:
                for chunk in r.iter_content(chunk_size=8192):
                    if not chunk:
                        continue
                    f.write(chunk)
                    downloaded += len(chunk)

                    if callback and total_size:
                        progress = (downloaded / total_size) * 100
                        now = time.monotonic()
                        # Emit when progress increased by >=0.5% OR at least 0.15s passed
                        if (progress - last_progress) >= 0.5 or (now - last_emit_time) >= 0.15:
                            callback(url, progress)
                            last_emit_time = now
                            last_progress = progress

        shutil.move(temp_path, target_path)
        if callback:
            callback(url, 100.0)
        logger.info(f"Checkpoint downloaded to {target_path}")
        return target_path

    except (requests.RequestException, OSError) as e:
        logger.error(f"Failed to download {url}: {e}")
        if os.path.exists(temp_path):
            os.remove(temp_path)
        raise HyperInvertError(f"Failed to download checkpoint from {url}: {e}") from e


def _extracted_root(extract_dir):
    # archives usually wrap the checkpoint in a single top-level folder
    entries = [e for e in os.listdir(extract_dir) if not e.startswith(".")]
    if len(entries) == 1 and os.path.isdir(os.path.join(extract_dir, entries[0])):
        return os.path.join(extract_dir, entries[0])
    return extract_dir


def fetch_remote_checkpoint(url, callback=None):
    """
    Download and extract a zipped checkpoint directory into the cache

    Args:
        url (str): http(s) URL of a .zip archive
        callback (function, optional): Progress callback (url, percent)

    Returns:
        str: Local checkpoint directory
    """
    key = _cache_key(url)
    cache_dir = get_cache_dir()
    extract_dir = os.path.join(cache_dir, key)
    partial_dir = extract_dir + ".partial"

    with download_lock:
        url_lock = current_downloads.setdefault(url, threading.Lock())

    try:
        with url_lock:
            if os.path.isdir(extract_dir):
                logger.debug(f"Checkpoint for {url} already cached at {extract_dir}")
                return _extracted_root(extract_dir)

            archive_path = os.path.join(cache_dir, key + ".zip")
            if not os.path.exists(archive_path):
                download_archive(url, archive_path, callback)

            # leftovers of an interrupted extraction
            shutil.rmtree(partial_dir, ignore_errors=True)
            try:
                with zipfile.ZipFile(archive_path) as archive:
                    archive.extractall(partial_dir)
            except zipfile.BadZipFile as e:
                os.remove(archive_path)
                shutil.rmtree(partial_dir, ignore_errors=True)
                raise HyperInvertError(f"Downloaded checkpoint from {url} is not a zip archive") from e
            shutil.move(partial_dir, extract_dir)
            logger.info(f"Checkpoint extracted to {extract_dir}")
    finally:
        with download_lock:
            current_downloads.pop(url, None)
    return _extracted_root(extract_dir)


def resolve_checkpoint(location, callback=None):
    """
    Turn a checkpoint argument into a local directory

    Args:
        location (str): Local directory or http(s) URL to a .zip archive
        callback (function, optional): Download progress callback

    Returns:
        str: Existing local directory
    """
    if is_remote(location):
        return fetch_remote_checkpoint(location, callback)
    if not os.path.isdir(location):
        raise HyperInvertError(f"Checkpoint directory not found: {location}")
    return location
