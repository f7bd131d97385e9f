"""cloudvault: desk-scale distributed secure file storage.

A system server authenticates clients with rotating one-time passwords,
encrypts every uploaded file under a fresh single-use AES-128 key, and
scatters the ciphertext across separate storage servers via quadratic-start
probing. Usernames and passwords are persisted only as MD5 digests; keys
never leave the system server, plaintext never reaches storage.
"""

__version__ = "0.1.0"
