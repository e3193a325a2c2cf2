"""Test suite for Stoch-Future"""
