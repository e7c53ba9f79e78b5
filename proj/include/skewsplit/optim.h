#ifndef SKEWSPLIT_OPTIM_H_
#define SKEWSPLIT_OPTIM_H_

#include <vector>

#include "skewsplit/tensor.h"

namespace skewsplit {

// Plain SGD with L2 weight decay:
//   p <- p - lr * (grad(p) + weight_decay * p)
// Gradients are zeroed afterwards. Throws Error if any parameter lacks a
// gradient (i.e. never reached by Backward()).
void SgdStep(const std::vector<Tensor*>& params, double lr,
             double weight_decay);

}  // namespace skewsplit

#endif  // SKEWSPLIT_OPTIM_H_
