#ifndef POSEKIT_PARALLEL_HPP
#define POSEKIT_PARALLEL_HPP

namespace posekit {

// Global worker count for the OpenMP kernels. Every parallel loop in this
// codebase partitions disjoint output ranges, so results are bit-identical
// for any thread count (including 1, the serial reference path).
void set_num_threads(int n);
int num_threads();

}  // namespace posekit

#endif
