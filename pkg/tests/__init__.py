"""
Test suite for the FedCME simulator
"""
