"""Filesystem, logging and random-stream helpers"""
