"""Multi-modal ECG classification: signal and image streams trained jointly, image-only inference."""

from vizecg.configurator import *
from vizecg.data import *
from vizecg.errors import *
from vizecg.model import *
from vizecg.raster import *
from vizecg.train import *

__python_version__ = "3.11"
__license__ = "MIT"
__version__ = "0.1.0"
