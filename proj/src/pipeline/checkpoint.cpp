#include "sem2/pipeline/checkpoint.hpp"

#include "sem2/core/error.hpp"

#include <cstring>
#include <fstream>

namespace sem2 {

namespace {

constexpr char kMagic[8] = {'S', 'E', 'M', '2', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ofstream& f, const T& v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::ifstream& f, T& v) {
    f.read(reinterpret_cast<char*>(&v), sizeof(T));
}

void write_mat(std::ofstream& f, const Mat& m) {
    write_pod(f, static_cast<int64_t>(m.rows()));
    write_pod(f, static_cast<int64_t>(m.cols()));
    f.write(reinterpret_cast<const char*>(m.data()),
            static_cast<long>(sizeof(double) * static_cast<size_t>(m.size())));
}

Mat read_mat(std::ifstream& f) {
    int64_t rows = 0, cols = 0;
    read_pod(f, rows);
    read_pod(f, cols);
    if (rows < 0 || cols < 0 || rows > (1 << 24) || cols > (1 << 24))
        throw IoError("checkpoint: corrupt tensor header");
    Mat m(rows, cols);
    f.read(reinterpret_cast<char*>(m.data()),
           static_cast<long>(sizeof(double) * static_cast<size_t>(m.size())));
    return m;
}

void write_store(std::ofstream& f, const nn::ParamStore& ps, int64_t opt_steps) {
    write_pod(f, static_cast<int64_t>(ps.count()));
    write_pod(f, opt_steps);
    for (int i = 0; i < ps.count(); ++i) {
        const std::string& name = ps.name(i);
        write_pod(f, static_cast<uint32_t>(name.size()));
        f.write(name.data(), static_cast<long>(name.size()));
        write_mat(f, ps.value(i));
        write_mat(f, const_cast<nn::ParamStore&>(ps).adam_m(i));
        write_mat(f, const_cast<nn::ParamStore&>(ps).adam_v(i));
    }
}

int64_t read_store(std::ifstream& f, nn::ParamStore& ps) {
    int64_t count = 0, opt_steps = 0;
    read_pod(f, count);
    read_pod(f, opt_steps);
    if (count != ps.count())
        throw IoError("checkpoint: parameter count mismatch (stored " + std::to_string(count) +
                      ", model has " + std::to_string(ps.count()) + ")");
    for (int i = 0; i < count; ++i) {
        uint32_t n = 0;
        read_pod(f, n);
        std::string name(n, '\0');
        f.read(name.data(), static_cast<long>(n));
        if (name != ps.name(i))
            throw IoError("checkpoint: parameter name mismatch at index " + std::to_string(i) +
                          " (stored '" + name + "', model has '" + ps.name(i) + "')");
        Mat v = read_mat(f), m = read_mat(f), vv = read_mat(f);
        if (v.rows() != ps.value(i).rows() || v.cols() != ps.value(i).cols())
            throw IoError("checkpoint: shape mismatch for parameter '" + name + "'");
        ps.value(i) = std::move(v);
        ps.adam_m(i) = std::move(m);
        ps.adam_v(i) = std::move(vv);
    }
    return opt_steps;
}

// keys that must agree between a checkpoint and the requesting config
std::vector<std::string> config_mismatches(const RunConfig& a, const RunConfig& b) {
    std::vector<std::string> bad;
    auto cmp = [&bad](const char* key, auto x, auto y) {
        if (x != y) bad.push_back(key);
    };
    cmp("variant", a.variant, b.variant);
    cmp("env.raster", a.env.raster, b.env.raster);
    cmp("model.d_h", a.model.d_h, b.model.d_h);
    cmp("model.groups", a.model.groups, b.model.groups);
    cmp("model.classes", a.model.classes, b.model.classes);
    cmp("model.d_m", a.model.d_m, b.model.d_m);
    cmp("model.embed", a.model.embed, b.model.embed);
    cmp("model.hidden", a.model.hidden, b.model.hidden);
    cmp("model.cnn_base", a.model.cnn_base, b.model.cnn_base);
    cmp("behavior.hidden", a.behavior.hidden, b.behavior.hidden);
    return bad;
}

} // namespace

void save_checkpoint(const std::string& path, const RunConfig& cfg, int64_t global_step,
                     const WorldModel& wm, const ActorCritic& ac) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("save_checkpoint: cannot open " + path);
    f.write(kMagic, sizeof(kMagic));
    write_pod(f, kVersion);
    const std::string cj = run_config_to_json(cfg).dump();
    write_pod(f, static_cast<uint64_t>(cj.size()));
    f.write(cj.data(), static_cast<long>(cj.size()));
    write_pod(f, global_step);
    write_store(f, wm.params(), wm.opt_steps());
    write_store(f, ac.params(), ac.actor_opt_steps());
    write_pod(f, ac.critic_opt_steps());
    if (!f) throw IoError("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path, const RunConfig* expect) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("load_checkpoint: cannot open " + path);
    char magic[8];
    f.read(magic, sizeof(magic));
    if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw IoError("load_checkpoint: " + path + " is not a checkpoint");
    uint32_t version = 0;
    read_pod(f, version);
    if (version != kVersion)
        throw IoError("load_checkpoint: unsupported version " + std::to_string(version));
    uint64_t clen = 0;
    read_pod(f, clen);
    std::string cj(clen, '\0');
    f.read(cj.data(), static_cast<long>(clen));

    Checkpoint ck;
    ck.config = run_config_from_json(nlohmann::json::parse(cj));
    if (expect) {
        const auto bad = config_mismatches(*expect, ck.config);
        if (!bad.empty()) {
            std::string msg = "checkpoint config mismatch in keys:";
            for (const auto& k : bad) msg += " " + k;
            throw UsageError(msg);
        }
    }
    read_pod(f, ck.global_step);

    // deterministic but irrelevant init; parameters are overwritten below
    Rng init(0);
    ck.world_model = std::make_unique<WorldModel>(ck.config.model, init.fork(1));
    ck.actor_critic = std::make_unique<ActorCritic>(ck.config.behavior,
                                                    ck.world_model->feature_dim(), init.fork(2));
    ck.world_model->set_opt_steps(read_store(f, ck.world_model->params()));
    const int64_t actor_steps = read_store(f, ck.actor_critic->params());
    int64_t critic_steps = 0;
    read_pod(f, critic_steps);
    ck.actor_critic->set_opt_steps(actor_steps, critic_steps);
    if (!f) throw IoError("load_checkpoint: truncated file " + path);
    return ck;
}

} // namespace sem2
