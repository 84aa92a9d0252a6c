"""Lockstep bridge between a mock driving simulator and a mock AV stack.

The simulator speaks a left-handed world over TCP; the AV stack expects
right-handed inputs and answers with Ackermann commands. The bridge sits in
the middle: it converts frames, translates commands into actuator values,
coordinates the fixed-step clock, and taps every message for latency
accounting.
"""

__version__ = "0.1.0"
