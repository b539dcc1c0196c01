"""SpinFlow library modules"""
