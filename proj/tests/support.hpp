#pragma once

#include <filesystem>
#include <string>

#include <unistd.h>

#include "mpq/dataset.hpp"
#include "mpq/graph.hpp"
#include "mpq/qat.hpp"

namespace testing_support {

inline std::filesystem::path fixture(const std::string& name) { return std::filesystem::path(MPQ_FIXTURE_DIR) / name; }

struct Desk {
    mpq::NetworkGraph graph;
    mpq::DatasetSplits data;
    mpq::FloatModel pretrained;
};

/// Toy CNN on the synthetic shapes set with a full-precision model. Training
/// is deterministic, so the checkpoint is cached between test binaries.
inline Desk desk(std::size_t n_train = 4000, std::size_t n_test = 1000, int epochs = 10) {
    namespace fs = std::filesystem;
    Desk d{mpq::load_graph(fixture("toycnn_mnist.json")), mpq::make_shapes_dataset(n_train, n_test, 1), {}};
    const fs::path ckpt = fs::path(MPQ_TEST_CACHE) /
                          ("toycnn_" + std::to_string(n_train) + "_" + std::to_string(epochs) + ".ckpt");
    if (fs::exists(ckpt)) {
        d.pretrained = mpq::load_checkpoint(ckpt);
    } else {
        mpq::TrainConfig tc;
        tc.learning_rate = 3e-3;
        tc.epochs = epochs;
        tc.seed = 1;
        d.pretrained = mpq::pretrain(d.graph, d.data.train, d.data.test, tc).model;
        fs::create_directories(ckpt.parent_path());
        const fs::path tmp = ckpt.string() + ".tmp" + std::to_string(::getpid());
        mpq::save_checkpoint(d.pretrained, tmp);
        fs::rename(tmp, ckpt);
    }
    return d;
}

}  // namespace testing_support
