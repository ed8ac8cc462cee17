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


// Writes the synthetic pretraining corpus and the segment-overlap
// classification files.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "xlnet/corpus.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Synthetic data for xlnet", "xlnet-gendata"};
  std::string out_dir = "data";
  std::size_t bytes = 1 << 20;
  std::size_t train = 50000, eval = 500, a_len = 1, b_len = 6;
  std::uint64_t seed = 1;
  std::string alphabet = "abcdefghijklmnopqrstuvwxyz";
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--corpus-bytes", bytes, "size of corpus.txt");
  app.add_option("--train", train, "overlap training examples");
  app.add_option("--eval", eval, "overlap held-out examples");
  app.add_option("--a-len", a_len, "characters in segment A");
  app.add_option("--b-len", b_len, "characters in segment B");
  app.add_option("--alphabet", alphabet, "characters segments are drawn from");
  app.add_option("--seed", seed, "random seed");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  try {
    std::filesystem::create_directories(out_dir);
    const std::filesystem::path dir(out_dir);
    std::ofstream(dir / "corpus.txt") << xlnet::synthetic_corpus(bytes, seed);
    std::ofstream tr(dir / "overlap_train.tsv");
    xlnet::write_overlap_tsv(tr, xlnet::make_overlap_task(train, a_len, b_len, alphabet, seed + 1));
    std::ofstream ev(dir / "overlap_eval.tsv");
    xlnet::write_overlap_tsv(ev, xlnet::make_overlap_task(eval, a_len, b_len, alphabet, seed + 2));
    std::cerr << "seed = " << seed << "\ncorpus_bytes = " << bytes << "\nwrote " << out_dir << '\n';
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
