"""trex: image-level tactile proxies, threshold calibration, and a
three-channel grasp reflex controller, validated against a simulated
gripper and deformable-cup plant."""

__version__ = "0.1.0"
