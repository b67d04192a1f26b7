"""Reference-free 3D reconstruction of brain dissection slab photographs."""
