from .archive import *
from .calib_data import *
