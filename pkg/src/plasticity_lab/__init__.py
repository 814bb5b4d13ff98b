__version__ = "0.3.0"

from . import layers
from . import network
from . import losses
from . import optimizers
from . import tasks
from . import diagnostics
from . import records
from . import harness
from . import config
from . import checkpoint
from . import utils
