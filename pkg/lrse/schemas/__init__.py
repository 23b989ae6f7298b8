from .compression import *
from .encoder import *
from .report import *
from .run import *
