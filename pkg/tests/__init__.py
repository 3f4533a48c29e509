"""
Test package for domainbus.
"""
