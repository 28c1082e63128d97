import json
import time
import logging
import platform
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, Iterable, List, Optional

import numpy as np

logger = logging.getLogger('cdplab')


def parallel_map(fn: Callable, items: Iterable, threads: int = 1) -> List[Any]:
    """Map fn over items on up to `threads` workers, results in input order"""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def package_versions() -> Dict[str, str]:
    """Versions of the numerical stack, recorded in run records"""
    import cv2
    import django
    import pandas
    import PIL
    import scipy
    import matplotlib

    return {
        'python': platform.python_version(),
        'django': django.get_version(),
        'numpy': np.__version__,
        'opencv': cv2.__version__,
        'pandas': pandas.__version__,
        'pillow': PIL.__version__,
        'scipy': scipy.__version__,
        'matplotlib': matplotlib.__version__,
    }


class StageTimer:
    """Collects wall-clock timings of named stage steps"""

    def __init__(self):
        self.timings: Dict[str, float] = {}
        self._started = time.time()

    def lap(self, name: str, start: float):
        self.timings[name] = round(time.time() - start, 3)

    @property
    def total(self) -> float:
        return round(time.time() - self._started, 3)


def write_run_record(path, command: str, arguments: Dict, seeds: Dict, timer: Optional[StageTimer] = None,
                     outputs: Optional[Dict] = None):
    """JSON record of one command invocation"""
    record = {
        'command': command,
        'arguments': arguments,
        'seeds': seeds,
        'versions': package_versions(),
        'timings': dict(timer.timings, total=timer.total) if timer else {},
        'outputs': outputs or {},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(record, f, indent=2, sort_keys=True, default=str)
        f.write('\n')
    logger.info(f"Run record written to {path}")
    return record
