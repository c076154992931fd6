"""force2kin - Learn the force-to-kinematics inverse map of a flapping wing"""

__version__ = "0.1.0"
