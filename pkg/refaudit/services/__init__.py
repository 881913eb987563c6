# Services layer: code facts, semantics, similarity, inspection, verification
