# modules/host_info.py
import os
import platform
from datetime import datetime

import numpy as np
import psutil

from ._jit import HAS_NUMBA, numba

try:
	import cpuinfo
except ImportError:
	cpuinfo = None


def get_cpu_info():
	"""Model name and core counts for bench reports; best effort, never raises."""
	model = None
	if cpuinfo:
		try:
			model = cpuinfo.get_cpu_info().get('brand_raw')
		except Exception:
			pass
	return {
		'model': model or platform.processor() or None,
		'physical_cores': psutil.cpu_count(logical=False),
		'logical_cores': psutil.cpu_count(logical=True),
	}


def get_os_info():
	return {
		'time': datetime.now().strftime("%Y-%m-%d %H:%M:%S"),
		'os': platform.system(),
		'version': platform.release(),
		'python': platform.python_version(),
	}


def get_memory_info():
	info = {'total_gb': None, 'available_gb': None}
	try:
		vm = psutil.virtual_memory()
		info['total_gb'] = round(vm.total / (1024 ** 3), 2)
		info['available_gb'] = round(vm.available / (1024 ** 3), 2)
	except Exception:
		pass
	return info


def rss_bytes():
	"""Resident set size of this process, 0 if psutil cannot read it."""
	try:
		return int(psutil.Process(os.getpid()).memory_info().rss)
	except Exception:
		return 0


def get_runtime_info():
	info = {
		'numpy': np.__version__,
		'numba': numba.__version__ if HAS_NUMBA else None,
		'jit': HAS_NUMBA,
		'threads': 1,
	}
	if HAS_NUMBA:
		try:
			info['threads'] = numba.get_num_threads()
		except Exception:
			pass
	return info


def describe_host():
	"""Everything a benchmark report needs to say where it ran."""
	return {
		'cpu': get_cpu_info(),
		'os': get_os_info(),
		'memory': get_memory_info(),
		'runtime': get_runtime_info(),
	}
