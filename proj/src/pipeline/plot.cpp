#include "sem2/core/error.hpp"
#include "sem2/core/image.hpp"
#include "sem2/pipeline/pipeline.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

namespace sem2 {

namespace fs = std::filesystem;

namespace {

struct Series {
    std::string name;
    Rgb color;
    std::vector<double> x, y;
};

std::string format_tick(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return buf;
}

void render_chart(const std::string& path, const std::string& title,
                  const std::vector<Series>& series) {
    const int W = 760, H = 440;
    const int ml = 76, mr = 14, mt = 26, mb = 34;
    Image img(H, W, 3, 255);

    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& s : series)
        for (size_t i = 0; i < s.x.size(); ++i) {
            xmin = std::min(xmin, s.x[i]);
            xmax = std::max(xmax, s.x[i]);
            ymin = std::min(ymin, s.y[i]);
            ymax = std::max(ymax, s.y[i]);
        }
    if (xmin > xmax) return;
    if (xmax == xmin) xmax = xmin + 1.0;
    if (ymax == ymin) {
        ymax += 0.5;
        ymin -= 0.5;
    }
    const double ypad = 0.05 * (ymax - ymin);
    ymin -= ypad;
    ymax += ypad;

    const Rgb axis{60, 60, 60}, grid{225, 225, 225}, text{40, 40, 40};
    auto px = [&](double x) {
        return ml + static_cast<int>((x - xmin) / (xmax - xmin) * (W - ml - mr));
    };
    auto py = [&](double y) {
        return H - mb - static_cast<int>((y - ymin) / (ymax - ymin) * (H - mt - mb));
    };

    for (int k = 0; k <= 4; ++k) {
        const double xv = xmin + (xmax - xmin) * k / 4.0;
        const double yv = ymin + (ymax - ymin) * k / 4.0;
        draw_line(img, mt, px(xv), H - mb, px(xv), grid);
        draw_line(img, py(yv), ml, py(yv), W - mr, grid);
        draw_text(img, H - mb + 6, px(xv) - text_width(format_tick(xv)) / 2, format_tick(xv), text);
        const std::string yl = format_tick(yv);
        draw_text(img, py(yv) - 3, ml - 6 - text_width(yl), yl, text);
    }
    draw_line(img, mt, ml, H - mb, ml, axis);
    draw_line(img, H - mb, ml, H - mb, W - mr, axis);
    draw_text(img, 8, ml, title, text);

    int ly = mt + 6;
    for (const auto& s : series) {
        for (size_t i = 1; i < s.x.size(); ++i)
            draw_line(img, py(s.y[i - 1]), px(s.x[i - 1]), py(s.y[i]), px(s.x[i]), s.color);
        if (s.x.size() == 1)
            fill_rect(img, py(s.y[0]) - 1, px(s.x[0]) - 1, py(s.y[0]) + 2, px(s.x[0]) + 2,
                      s.color);
        draw_line(img, ly + 3, W - mr - 86, ly + 3, W - mr - 72, s.color);
        draw_line(img, ly + 4, W - mr - 86, ly + 4, W - mr - 72, s.color);
        draw_text(img, ly, W - mr - 68, s.name, text);
        ly += 12;
    }
    write_png(path, img);
}

const Rgb kPalette[] = {
    {31, 119, 180}, {255, 127, 14}, {44, 160, 44},
    {214, 39, 40},  {148, 103, 189}, {140, 86, 75},
};

} // namespace

std::vector<std::string> plot_metrics(const std::string& metrics_path,
                                      const std::string& out_dir) {
    std::ifstream f(metrics_path);
    if (!f) throw UsageError("cannot open metrics file " + metrics_path);
    fs::create_directories(out_dir);

    std::map<std::string, Series> loss;
    const char* loss_keys[] = {"loss_total", "image_nll", "mask_nll", "reward_nll", "kl"};
    Series ep_return{"return", kPalette[0], {}, {}};
    Series ep_len{"length", kPalette[1], {}, {}};
    Series eval_mean{"eval", kPalette[2], {}, {}};
    Series actor{"actor", kPalette[3], {}, {}};
    Series critic{"critic", kPalette[4], {}, {}};

    std::string line;
    size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            throw UsageError(metrics_path + ":" + std::to_string(lineno) +
                             ": not a JSON record: " + e.what());
        }
        const std::string kind = j.value("kind", "");
        const double step = j.value("global_step", 0.0);
        if (kind == "update") {
            int ci = 0;
            for (const char* key : loss_keys) {
                if (!j.contains(key)) continue;
                auto& s = loss[key];
                if (s.name.empty()) {
                    s.name = key;
                    s.color = kPalette[ci % 6];
                }
                s.x.push_back(step);
                s.y.push_back(j[key].get<double>());
                ++ci;
            }
            actor.x.push_back(step);
            actor.y.push_back(j.value("actor_loss", 0.0));
            critic.x.push_back(step);
            critic.y.push_back(j.value("critic_loss", 0.0));
        } else if (kind == "episode") {
            ep_return.x.push_back(step);
            ep_return.y.push_back(j.value("return", 0.0));
            ep_len.x.push_back(step);
            ep_len.y.push_back(j.value("length", 0.0));
        } else if (kind == "eval") {
            eval_mean.x.push_back(step);
            eval_mean.y.push_back(j.value("mean_return", 0.0));
        }
    }

    std::vector<std::string> written;
    auto emit = [&](const std::string& name, const std::string& title,
                    std::vector<Series> series) {
        size_t pts = 0;
        for (const auto& s : series) pts += s.x.size();
        if (pts == 0) return;
        const std::string path = (fs::path(out_dir) / name).string();
        render_chart(path, title, series);
        written.push_back(path);
    };

    {
        std::vector<Series> ls;
        int ci = 0;
        for (const char* key : loss_keys) {
            auto it = loss.find(key);
            if (it != loss.end()) {
                it->second.color = kPalette[ci % 6];
                ls.push_back(it->second);
            }
            ++ci;
        }
        emit("model_loss.png", "world model loss", ls);
    }
    emit("behavior_loss.png", "actor and critic loss", {actor, critic});
    emit("returns.png", "episode return", {ep_return});
    emit("episode_length.png", "episode length", {ep_len});
    emit("eval_return.png", "eval mean return", {eval_mean});
    return written;
}

} // namespace sem2
