// Copyright 2026 The xlnet-desk Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


#pragma once

#include "xlnet/autodiff.hpp"
#include "xlnet/checkpoint.hpp"
#include "xlnet/checks.hpp"
#include "xlnet/corpus.hpp"
#include "xlnet/coverage.hpp"
#include "xlnet/gradcheck.hpp"
#include "xlnet/model.hpp"
#include "xlnet/perm_mask.hpp"
#include "xlnet/rel_attention.hpp"
#include "xlnet/rng.hpp"
#include "xlnet/tensor.hpp"
#include "xlnet/trainer.hpp"
