from . import calibrate, compress, import_whisper, pipeline, sweep, synth, verify

COMMANDS = (synth, import_whisper, calibrate, compress, verify, sweep, pipeline)
